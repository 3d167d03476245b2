"""BER of K-best (float and 16-bit) against exhaustive ML on a small link.

Run with ``python demos/ber_curves.py``; takes a few seconds.
"""

from kbest.detector import DetectorConfig
from kbest.simkit import LinkConfig, sweep

det = DetectorConfig(n_t=2, n_r=2, m=16, k=4, rlimit=4)
fixed = DetectorConfig(n_t=2, n_r=2, m=16, k=4, rlimit=4, arithmetic="s1.7.8")
cfg = LinkConfig(det, snr_db_list=(8, 12, 16, 20, 24), trials_per_snr=5000, seed=1)

kb, kb_fixed, ml = sweep(cfg, [det, fixed, "ml"])
print(f"{'SNR dB':>6} {'K-best':>10} {'s1.7.8':>10} {'ML':>10}")
for a, b, c in zip(kb.points, kb_fixed.points, ml.points):
    print(f"{a.snr_db:6.1f} {a.ber:10.2e} {b.ber:10.2e} {c.ber:10.2e}")
