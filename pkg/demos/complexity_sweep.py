"""How attention cost grows with the feature-map size.

Dense self-attention over all pyramid tokens grows with the square of the
token count; deformable self-attention grows linearly; the decoder's
cross-attention does not grow at all.

    python demos/complexity_sweep.py
"""

from deformdet.attention import AttnConfig
from deformdet.bench import benchmark

# small channel count so this finishes in seconds.  The decoder cost is flat once
# the map has more pixels than the 30 * 4 * 4 sampled points; below that,
# projecting the whole map is cheaper and the count is smaller still.
cfg = AttnConfig(n_heads=8, d_model=32, n_points=4, n_levels=4)
result = benchmark(cfg, sizes=(192, 256, 320, 384), n_queries=30)

print(f"{'image':>6} {'tokens':>7} {'dense MACs':>14} {'deform MACs':>13} {'decoder MACs':>13}")
for row in result["rows"]:
    print(f"{row['image_size']:>6} {row['HW']:>7} {row['dense_macs']:>14,} {row['deform_macs']:>13,} "
          f"{row['decoder_macs']:>13,}")

exps = result["exponents"]
print(f"\ngrowth exponent vs tokens: dense {exps['dense']:.2f}, deformable {exps['deformable']:.2f}, "
      f"decoder {exps['decoder']:.2f}")
print("measured / estimated:", {k: round(v[-1], 2) for k, v in result["estimate_ratios"].items()})
