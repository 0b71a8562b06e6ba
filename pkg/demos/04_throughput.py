"""Measure forward-pass throughput of three intermediate-placement
variants and report speedups against the dense baseline.

Absolute tokens/sec depends on the machine; the FLOP ratios are exact
and the direction of the speedups should match them on any CPU.
"""

from dataclasses import replace

from slimformer import bench as B
from slimformer import encoder as E

shape = dict(hidden_size=64, num_heads=4, intermediate_size=384,
             num_attention_blocks=6, vocab_size=256, max_position=512,
             type_vocab=2)
dense = E.EncoderConfig(**shape)
halved = replace(dense, period=E.IntermediatePeriod.every(2))
lean = replace(dense, period=E.IntermediatePeriod.none())

baseline = B.BenchSpec("every:1", dense, batch_sizes=(16,), seq_lens=(128, 256))
variants = [B.BenchSpec("every:2", halved, batch_sizes=(16,), seq_lens=(128, 256)),
            B.BenchSpec("none", lean, batch_sizes=(16,), seq_lens=(128, 256))]

report = B.sweep(baseline, variants)
print(f"{'variant':<10}{'S':>6}{'tokens/sec':>14}{'speedup':>10}{'flop ratio':>12}")
for r in report.rows:
    print(f"{r.variant:<10}{r.seq_len:>6}{r.tokens_per_sec_median:>14,.0f}"
          f"{r.speedup_vs_baseline:>10.2f}{r.flop_ratio_vs_baseline:>12.2f}")

print("\nplot data (seq_len vs speedup, one block per variant):")
print(report.plot_data())
