"""Parameter budget of the size variants and how latency grows with tokens."""

# %% [markdown]
# Parameter counts are closed-form. The toy image backbone is reported but
# kept out of the transformer total.

# %%
from fastmetro.bench import token_sweep
from fastmetro.model import ModelConfig, count_parameters

for name in ("S", "M", "L"):
    counts = count_parameters(ModelConfig.variant(name))
    print(f"{name}: transformer {counts['total'] / 1e6:.2f}M  "
          f"(encoder {counts['encoder'] / 1e6:.2f}M, decoder {counts['decoder'] / 1e6:.2f}M)")

# %% [markdown]
# One 512-wide encoder layer timed over growing sequences. The linear
# layers scale with the token count and attention with its square, so
# quadrupling the tokens costs more than four times as much.

# %%
rows = token_sweep(512, 8, (64, 128, 256, 512), iters=3)
for r in rows:
    print(f"{r['tokens']:>4} tokens: {r['median_ms']:7.1f} ms")
print("512 / 128 ratio:", round(rows[3]["median_ms"] / rows[1]["median_ms"], 2))
