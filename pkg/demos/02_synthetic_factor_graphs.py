"""
Synthetic graphs with latent factors
====================================

Each factor is a planted-partition random graph over the same nodes; the
observed graph is their union and every node carries one label per factor.
"""

import numpy as np

from lgdgcn.datagen import SynthSpec, densify_series, split_fraction, synth_generate

spec = SynthSpec.table5(4, seed=7)
bundle = synth_generate(spec)
print(f"factors={spec.factors} p={spec.p} q={spec.q} nodes={bundle.n} classes={bundle.num_classes}")
print(f"average neighbourhood size: {bundle.graph.average_degree():.2f}")

###############################################################################
# Label sets. Two factors can hand a node the same class, so a few nodes end
# up with fewer than four labels.

sizes = bundle.labels.sum(axis=1).astype(int)
values, counts = np.unique(sizes, return_counts=True)
print("labels per node:", dict(zip(values.tolist(), counts.tolist())))
print("nodes per class:", bundle.labels.sum(axis=0).astype(int).tolist())

###############################################################################
# Features are the adjacency rows themselves.

print("features equal adjacency:", bool(np.array_equal(bundle.features, bundle.graph.to_dense())))

###############################################################################
# Sparser versions of the same protocol, found by bisection on p.

for target, s in zip([40, 20, 6], densify_series(spec, [40, 20, 6])):
    deg = synth_generate(s).graph.average_degree()
    print(f"target degree {target:>2}: p={s.p:.4f} realised {deg:.2f}")

split = split_fraction(bundle, (0.6, 0.2, 0.2), seed=7)
print("split sizes:", int(split.train_mask.sum()), int(split.val_mask.sum()), int(split.test_mask.sum()))
