"""A tour of the building blocks: shapes, attention maps, and the
random-feature kernel approximation.

Run:  python3 demos/01_blocks_tour.py
"""

import numpy as np

from vertseg import no_grad
from vertseg.autodiff import Tensor
from vertseg.blocks import (ASPP, PSA, ConvBlock, RandomFeatureParams,
                            SpatialAttention, SqueezeExciteRF,
                            random_feature_map)

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(1, 16, 32, 32)))

print("input:", x.shape)

with no_grad():
    conv = ConvBlock(16, 24, np.random.default_rng(1))
    print("conv block      ->", conv(x).shape, "(two 3x3 convs + BN + relu)")

    aspp = ASPP(16, 16, np.random.default_rng(2))
    print("aspp            ->", aspp(x).shape, "(5 branches, concat, project)")

    sa = SpatialAttention(np.random.default_rng(3))
    refined, amap = sa(x)
    print("spatial attn    ->", refined.shape,
          f"map in ({amap.data.min():.3f}, {amap.data.max():.3f})")

    psa = PSA(16, 4, (3, 5, 7, 9), reduction=4, rng=np.random.default_rng(4))
    _, attn = psa.group_attention(x)
    print("psa             ->", psa(x).shape,
          f"group weights sum to {attn.data.sum(axis=1).mean():.6f} per slot")

    params = RandomFeatureParams.draw(16, 64, sigma=1.0, seed=5)
    se = SqueezeExciteRF(16, params, reduction=4, rng=np.random.default_rng(6))
    print("squeeze-rf      ->", se(x).shape)

# How well do the random cosine features approximate the Gaussian kernel?
params = RandomFeatureParams.draw(8, 1024, sigma=1.0, seed=7)
errs = []
for _ in range(200):
    a, b = rng.normal(size=8), rng.normal(size=8)
    approx = random_feature_map(a, params) @ random_feature_map(b, params)
    exact = np.exp(-np.sum((a - b) ** 2) / 2.0)
    errs.append(abs(approx - exact))
print(f"\nrandom-feature kernel approximation: mean |error| = {np.mean(errs):.4f} "
      f"(D=1024 features)")
