"""Walk one 8x8 64-QAM vector through preprocessing, search and the pipeline.

Run with ``python demos/single_detection.py``.
"""

import numpy as np

from kbest.detector import DetectorConfig, detect, unmap
from kbest.linalg import preprocess
from kbest.pipeline import pipeline_run, trace_to_csv
from kbest.simkit import noise_power_for_snr, qam_modulate, sample_channel, sample_noise, symbol_energy

rng = np.random.default_rng(7)
cfg = DetectorConfig()  # 8x8, 64-QAM, K = Rlimit = 4
snr_db = 30.0

# %% transmit
bits = rng.integers(0, 2, cfg.n_t * cfg.bits_per_symbol)
s = qam_modulate(bits, cfg.m)
H = sample_channel(rng, cfg.n_r, cfg.n_t)
n0 = noise_power_for_snr(snr_db, cfg.n_t, cfg.m)
y = H @ s + sample_noise(rng, cfg.n_r, n0)

# %% MMSE extension, shift/scale, lattice reduction and QR
prep = preprocess(H, y, n0, symbol_energy(cfg.m) / 2)
print("LLL transform is unimodular:", abs(abs(np.linalg.det(prep.T)) - 1) < 1e-9)
print("R diagonal:", np.round(np.diag(prep.R).real, 3))

# %% K-best search in floating point and in 16-bit fixed point
for arith in ("float", "s1.7.8"):
    c = DetectorConfig(arithmetic=arith)
    res = detect(prep.y_rot, prep.R, c, trace=True)
    s_hat = unmap(res.z_hat, prep.T, c.m)
    print(f"{arith:>7}: symbol errors {int(np.sum(s_hat != s))}, "
          f"nodes {res.total_nodes} (per level {res.nodes_per_level}), ped {res.best.ped:.4f}")

# %% cycle schedule of the last detection
run = pipeline_run(1, cfg, [res.trace])
print(f"pipeline: {run.total_cycles} cycles for one vector")
print("\n".join(trace_to_csv(run.records).splitlines()[:10]))
