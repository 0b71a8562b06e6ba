"""Walk the variant matrix and print parameter counts and FLOP ratios.

The three modifications compose: sparser intermediate placement shrinks
the network, normalized attention adds only two scalars per head, and
dropping the MLP-side layernorm removes 2H parameters per unit.
"""

from dataclasses import replace

from slimformer import bench as B
from slimformer import encoder as E

base = E.BERT_BASE
print(f"{'variant':<24}{'params':>14}{'size ratio':>12}{'flop ratio':>12}")

variants = [("n=1 (base)", base)]
for n in (2, 3, 4, 6):
    variants.append((f"n={n}", replace(base, period=E.IntermediatePeriod.every(n))))
variants.append(("n=inf", replace(base, period=E.IntermediatePeriod.none())))
variants.append(("bandd", E.bandd(base)))
variants.append(("nomlpln", E.no_mlp_layernorm(base)))
variants.append(("bandd+nomlpln+n=2",
                 replace(E.no_mlp_layernorm(E.bandd(base)),
                         period=E.IntermediatePeriod.every(2))))

base_count = E.count_parameters(base)
for name, cfg in variants:
    count = E.count_parameters(cfg)
    print(f"{name:<24}{count.total:>14,}"
          f"{E.size_ratio(base_count, count):>12.2f}"
          f"{B.flop_ratio(base, cfg, batch=32, seq_len=128):>12.2f}")

print()
print("breakdown of the base model:")
for field in ("embeddings", "attention", "intermediate", "layernorms", "pooler"):
    print(f"  {field:<14}{getattr(base_count, field):>14,}")
