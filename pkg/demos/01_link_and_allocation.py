"""From a MIMO channel to a per-group symbol budget, one step at a time.

Run:  python3 demos/01_link_and_allocation.py

1. Draw a 4x4 Rayleigh channel and split it into parallel subchannels with the SVD.
2. Score how well each latent group fits each subchannel (the correlation map).
3. Match groups to subchannels with the Hungarian solver.
4. Turn the match into a bits-to-symbols ratio eta per group and a symbol count k.
"""

import numpy as np

from cvst.allocator import EtaConfig, assign_groups, bandwidth_cost, compute_eta
from cvst.corrmap import EmbeddingHead, build_map
from cvst.latent import GroupPartition
from cvst.mimo import ChannelSpec, SvdPrecoder, lmmse_gain, sample_rayleigh, subchannel_snr
from cvst.numerics import ParamStore, SeededRng

rng = SeededRng(2024)
spec = ChannelSpec(n_tx=4, n_rx=4, snr_db=8.0)
H = sample_rayleigh(rng.spawn("H"), spec)
pre = SvdPrecoder.from_channel(H)
print("singular values  :", np.round(pre.lam, 3))
print("subchannel SNR dB:", np.round(subchannel_snr(pre, spec.noise()), 2))
print("LMMSE gains      :", np.round(lmmse_gain(pre, spec.noise()), 3))

part = GroupPartition(channels=16, m=2, n_tx=4)  # 8 groups in two gathers of four
head = EmbeddingHead(ParamStore(), part, 4, rng=rng.spawn("head"))
latent = rng.normal(0, 1, (16, 6, 6))
latent[:4] *= 4.0  # make the first two groups carry much more energy
cmap = build_map(latent, H, pre, head)
print("\ncorrelation map (rows = groups, columns = subchannels; each gather's columns sum to 1):")
print(np.round(cmap.scores, 3))

assignment = assign_groups(cmap.scores, part.n_tx)
eta_c = compute_eta(cmap.scores, EtaConfig(), "context", assignment)
eta_v = compute_eta(cmap.scores, EtaConfig(), "motion", assignment)
print("\nassignment (group -> subchannel):", assignment.tolist())
print("eta context:", np.round(eta_c, 3))
print("eta motion :", np.round(eta_v, 3))

bits = np.array([120.0, 95.0, 40.0, 33.0, 20.0, 18.0, 6.0, 0.5])
k = bandwidth_cost(bits, eta_c, 36)
print("\nbits per group   :", bits.tolist())
print("symbols per group:", [int(v) for v in k], "(k = clamp(ceil(eta * bits), 1, k_max))")
