"""Throughput, latency and clock period of the pipelined detector versus
clock frequency, plus a fill-and-drain run.

Run with ``python demos/pipeline_timing.py``.
"""

from kbest.detector import DetectorConfig
from kbest.pipeline import pipeline_run, report

cfg = DetectorConfig()
for f_mhz in (100.0, 181.8, 250.0):
    r = report(f_mhz * 1e6, cfg, 63.75)
    print(f"{f_mhz:6.1f} MHz: {r.throughput_bps / 1e6:7.1f} Mbps, "
          f"{r.latency_per_level_s * 1e6:.4f} us/level, NHE {r.nhe:.5f} kG/Mbps")

run = pipeline_run(20, cfg)
print("entry cycles:", run.entry_cycles[:5], "...")
print("completion gaps:", sorted(set(run.completion_gaps)), "cycles")
print("total cycles for 20 vectors:", run.total_cycles)
