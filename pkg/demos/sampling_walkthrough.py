"""Walk through one multi-scale deformable attention call by hand.

    python demos/sampling_walkthrough.py
"""

# %% A two-level pyramid and a single query in the middle of the image
import numpy as np

from deformdet.attention import (AttnConfig, MacCounter, flop_estimate, init_deform_params, ms_deform_attn,
                                   predict_sampling_params, sampling_locations)

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(0)

cfg = AttnConfig(n_heads=8, d_model=16, n_points=2, n_levels=2)
shapes = [(8, 8), (4, 4)]
pyramid = [rng.normal(size=(1, 16, h, w)) for h, w in shapes]
query = rng.normal(size=(1, 1, 16))
reference = np.array([[[0.5, 0.5]]])

# %% At initialization every head looks along its own compass direction
params = init_deform_params(cfg, rng=rng)
plan = predict_sampling_params(query, params, cfg)
print("attention weights (all equal to 1/(L*K) = 0.25):")
print(plan.weights[0, 0, :, :, :].reshape(8, -1))

loc = sampling_locations(plan, reference, shapes)[0, 0]  # [M, L, K, 2]
print("\nhead 0 samples on the fine level (pixels):", loc[0, 0])
print("head 4 samples on the fine level (pixels):", loc[4, 0])
print("the reference sits at pixel", np.array(reference[0, 0]) * [7, 7], "on the 8x8 level")

# %% The offsets are in pixels of each level, so the coarse level reaches further in image terms
print("\nhead 7, coarse level:", loc[7, 1], "-> normalized", loc[7, 1] / [3, 3])

# %% Output and cost
# "auto" projects the sampled vectors instead of the whole map when that is cheaper,
# which it is here: 8 sampled points per level against 80 pixels
counter = MacCounter()
out = ms_deform_attn(query, reference, pyramid, params, cfg, order="auto", counter=counter)
print("\noutput shape", out.shape)
print("measured MACs by term:", dict(counter))
est = flop_estimate(cfg, n_queries=1, n_keys=sum(h * w for h, w in shapes))
print("estimate:", est.flops_deform, "deformable vs", est.flops_dense, "dense")

# %% Both orders of the value projection give the same answer
pre = ms_deform_attn(query, reference, pyramid, params, cfg, order="pre")
post = ms_deform_attn(query, reference, pyramid, params, cfg, order="post")
print("\npre/post projection max difference:", np.abs(pre - post).max())
