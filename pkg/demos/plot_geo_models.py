"""
Linear versus one hidden layer
==============================

Species presence as a function of position is not linear, so a single
hidden layer of 256 units pays off quickly. Both models train with the
asymmetric loss and are scored by validation micro-F1 on their 20 best
species.
"""

import numpy as np

from tilefreq.data import SynthConfig, site_coordinates, synth_generate
from tilefreq.losses import LossHyper
from tilefreq.training import TrainConfig, train_classifier

ds = synth_generate(SynthConfig(numSites=5000, seed=0, testFraction=0.0))
coords = site_coordinates(ds.records)
x = np.array([coords[int(s)] for s in ds.labels.site_ids])
y = ds.labels.dense().astype(float)

config = TrainConfig(LossHyper("asl"), learning_rate=5.0, epochs=10)
for arch in ("linear", "mlp256"):
    report = train_classifier(x, y, arch, config)
    curve = " ".join("%.3f" % f for f in report.val_micro_f1)
    print("%-7s best epoch %2d  val F1 %s" % (arch, report.best_epoch, curve))
