"""Walk the main and fusion branches at desk and full resolution.

Every fused map keeps the shape of the main-branch map it is added to, so the
final feature has the same width whether or not fusion is on.
"""
import numpy as np

from msann import tensor as T
from msann.fusion import FusionNetConfig, VisualBranch, fuse_maps, random_image_batch

for name, cfg in (("desk", FusionNetConfig.desk()), ("full", FusionNetConfig.full())):
    branch = VisualBranch(cfg, np.random.default_rng(0))
    branch.train()
    with T.no_grad():
        trace = branch(random_image_batch(cfg, 1, np.random.default_rng(1)))
        concat = fuse_maps(trace.M, {}, "concat_avgpool", cfg.fused_layers)
    print(f"{name} ({cfg.input_size}x{cfg.input_size} input)")
    for l in sorted(trace.M):
        print(f"  scale {l}: M {trace.M[l].shape[1:]}  fused {trace.fused[l].shape[1:]}")
    print(f"  f_v sum mode {trace.f_v.shape[1]}, concat_avgpool {concat.f_v.shape[1]}")
