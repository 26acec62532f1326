"""Tour of the on-disk formats: the EMB1 container and dataset directories.

Writes a tiny embedding bundle, hex-dumps the container header, reads it
back, then round-trips a small dataset directory and points out where the
labels, provenance, and payload live.

Run:  python3 demos/06_file_formats.py
"""

import io
import json
import os
import tempfile

import numpy as np

from attnrank import EmbeddingBundle, load_bundle, save_bundle
from attnrank.episodes import (build_mnist_style, read_dataset, synth_class_pool,
                               write_dataset)
from attnrank.numerics import make_rng


def hexdump(raw, limit=64):
    for off in range(0, min(len(raw), limit), 16):
        chunk = raw[off:off + 16]
        hexes = " ".join(f"{b:02x}" for b in chunk)
        text = "".join(chr(b) if 32 <= b < 127 else "." for b in chunk)
        print(f"  {off:04x}  {hexes:<47}  {text}")


bundle = EmbeddingBundle(
    query=np.array([[0.25, 0.75]]),
    candidates=np.array([[[1.0, 0.0]], [[0.0, 1.0]]]),
)
buf = io.BytesIO()
save_bundle(bundle, buf)
raw = buf.getvalue()

print("EMB1 container: magic, version byte, little-endian manifest length,")
print("JSON manifest, then row-major float64 matrices in manifest order.\n")
hexdump(raw)
mlen = int.from_bytes(raw[5:9], "little")
manifest = json.loads(raw[9:9 + mlen])
print(f"\nmanifest ({mlen} bytes of JSON):")
print(json.dumps(manifest, indent=2)[:400])

buf.seek(0)
back = load_bundle(buf)
print("\nround-trip is bit-exact:",
      np.array_equal(back.query, bundle.query)
      and np.array_equal(back.candidates, bundle.candidates))

with tempfile.TemporaryDirectory() as tmp:
    pool = synth_class_pool(make_rng(3), 120, 10, [0.4, 0.8])
    ds = build_mnist_style(make_rng(4), pool, t=10, episodes=5, seed=3)
    path = os.path.join(tmp, "demo-dataset")
    write_dataset(ds, path)
    print(f"\ndataset directory: {sorted(os.listdir(path))}")
    doc = json.loads(open(os.path.join(path, "manifest.json")).read())
    print("manifest keys:", sorted(doc))
    print("first episode record:", doc["episodes"][0])
    again = read_dataset(path)
    print("episodes survive the round trip:",
          [ep.labels for ep in again.episodes] == [ep.labels for ep in ds.episodes])
