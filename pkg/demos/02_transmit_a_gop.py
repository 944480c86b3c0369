"""Train the desk model (or load one) and send a 12-frame clip over a 2x2 link.

Run:  python3 demos/02_transmit_a_gop.py [checkpoint]

Without a checkpoint the two-stage schedule runs first (about a minute).  The
script prints, per frame, the reconstruction PSNR and how the symbols split
between context, motion and the two hyperprior side streams.
"""

import sys

from cvst import training, video
from cvst.numerics import SeededRng
from cvst.pipeline import run_gop

if len(sys.argv) > 1:
    model, _ = training.load_checkpoint(sys.argv[1])
else:
    print("training the desk model ...", flush=True)
    model, trainer = training.train_model(seed=0)
    print(f"done: {trainer.step_index} steps, final loss {trainer.history[-1].L_t:.1f}")

clip = video.synth_video(video.ClipSpec(32, 32, 12, speed=(4, 0), pattern_seed=7), SeededRng(7))
for lam in (0.015, 0.32):
    res = run_gop(clip, model, lam, snr_db=10.0, rng=SeededRng(1))
    print(f"\nlambda = {lam}, SNR = 10 dB")
    print(" t   PSNR    CBR    k_c  k_v  k_cz  k_vz")
    for t, led in enumerate(res.ledgers):
        print(f"{t:2d}  {video.psnr(clip[t], res.frames[t]):5.2f}  {led.cbr:.4f}  "
              f"{led.k_c:4d} {led.k_v:4d} {led.k_cz:4d}  {led.k_vz:4d}")
