"""Small versions of the two measurement campaigns.

The full sizes are ``opcgate bench q1`` and ``opcgate bench q2``.

Run: python3 walkthroughs/04_measurements.py
"""

from opcgate import bench

q1 = bench.bench_q1(n=200, warmup=20)
for arm, agg in q1.aggregates.items():
    print(f"{arm:<9} tagged={agg['tagged_records']} "
          f"processing mean={agg['processing_ns_tagged']['mean'] / 1000:.1f} us "
          f"handshake mean={agg['handshake_ms']['mean']:.3f} ms")
for metric, cmp in q1.comparison.items():
    print(f"  {metric}: ratio {cmp['ratio']:.3f}")

q2 = bench.bench_q2(trials=60)
print("\nmedian propagation delay (s)")
print(f"{'cell':<18}{'L1':>8}{'L2':>8}")
for p in bench.DEFAULT_PRESETS:
    for s in bench.DEFAULT_SIZES:
        print(f"{p + '/' + str(s):<18}{q2.aggregates[f'L1/{p}/{s}']['median']:>8.2f}"
              f"{q2.aggregates[f'L2/{p}/{s}']['median']:>8.2f}")
print("worst L1 delay", round(q2.comparison["L1_max_delay_s"], 2), "s")
