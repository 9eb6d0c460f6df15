"""Anatomy of the diagnosis model and its checkpoint format.

Builds the network, walks its parameter registry, shows what freezing the
backbone changes, and round-trips all weights through an NTC file to show
the checkpoint is a bitwise-faithful container.

Run: python3 demos/02_model_anatomy.py
"""

import tempfile
from collections import Counter
from pathlib import Path

import numpy as np

from ct_diag.weights_io import bind_weights, load_ntc, save_ntc
from ct_diag.xception import build_modified_xception


def banner(title):
    print()
    print(title)
    print("-" * len(title))


banner("construction and exact parameter accounting")
model = build_modified_xception()
total, trainable = model.count_params()
print(f"total parameters:           {total:>12,}")
print(f"trainable (nothing frozen): {trainable:>12,}")
model.freeze_base()
total, trainable = model.count_params()
base = sum(pt.size for pt in model.registry.values() if not pt.name.startswith("head/"))
print(f"trainable after freezing:   {trainable:>12,}  (the head alone)")
print(f"backbone parameters:        {base:>12,}")
print(f"conv layers counted:        {model.conv_layer_count:>12}  "
      "(stem convs + separable convs; 1x1 projections excluded)")

banner("registry layout")
groups = Counter(pt.name.split("/")[0] for pt in model.registry.values())
for group, count in groups.items():
    scalars = sum(pt.size for pt in model.registry.values() if pt.name.startswith(group))
    print(f"{group:<8} {count:>3} tensors, {scalars:>12,} values")
print("first tensors in registry order:")
for pt in list(model.registry.values())[:6]:
    print(f"  {pt.name:<38} {pt.shape}")

banner("feature geometry tracks the input size; parameters do not")
for size in (224, 64):
    probe = build_modified_xception(input_size=size)
    h, w, c = probe.base_output_shape
    print(f"input {size}x{size}x3 -> backbone features {h}x{w}x{c} "
          f"(total params still {probe.count_params()[0]:,})")

banner("head stack")
for pt in model.registry.values():
    if pt.name.startswith("head/"):
        print(f"  {pt.name:<30} {pt.shape}")
print("dense(2048->128) + relu + batch norm + dropout + dense(128->1) + sigmoid")

banner("NTC checkpoint round trip")
model.init_weights(seed=42)
digest = model.base_digest()
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.ntc"
    save_ntc(model.state_items(), path)
    print(f"saved {len(model.registry)} tensors, {path.stat().st_size:,} bytes on disk")
    clone = build_modified_xception()
    bind_weights(clone, load_ntc(path))
    identical = all(
        np.array_equal(clone.registry[name].values, model.registry[name].values)
        for name in model.registry
    )
    print(f"reloaded into a fresh model: every tensor bitwise identical = {identical}")
    print(f"backbone digests match: {clone.base_digest() == digest}")

banner("backbone-only checkpoints")
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "base.ntc"
    save_ntc([(n, v) for n, v in model.state_items() if not n.startswith("head/")], path)
    pretrained = build_modified_xception()
    bind_weights(pretrained, load_ntc(path), allow_missing_head=True)
    pretrained.init_head(seed=0)
    print("bound a base-only file, drew a fresh head: "
          f"fully loaded = {pretrained.weights_loaded}")
    print("this is the shape of a pretrained-backbone import "
          "(see the exporter subproject)")
