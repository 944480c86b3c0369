"""How link quality and channel knowledge show up in the picture.

Run:  python3 demos/03_csi_and_snr.py [checkpoint]

Sweeps the SNR with perfect CSI and with least-squares channel estimates from
pilots, over 10 seeded clips.  Seeds share their channel draws across the grid,
so the differences are paired.
"""

import sys

from cvst import experiment, training
from cvst.experiment import ChannelSettings, ExperimentConfig

model = training.load_checkpoint(sys.argv[1])[0] if len(sys.argv) > 1 else training.train_model(seed=0)[0]

base = ExperimentConfig(seeds=tuple(range(10)), snrs_db=(0.0, 4.0, 8.0, 14.0), lambdas=(0.12,))
print("SNR dB   perfect CSI   LS CSI (PSNR dB)")
results = {}
for csi in ("perfect", "ls"):
    _, summary = experiment.run(ExperimentConfig(**{**base.__dict__, "channel": ChannelSettings(csi=csi)}), model)
    results[csi] = [p["psnr_mean"] for p in summary["points"]]
for snr, a, b in zip(base.snrs_db, results["perfect"], results["ls"]):
    print(f"{snr:6.1f}   {a:10.2f}   {b:8.2f}")
