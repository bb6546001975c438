"""
Scoring uncertainties without a model
=====================================

The error-reduction curve, the relative log likelihood and the isotonic
calibration map only need errors and uncertainties, so synthetic numbers
are enough to see how they behave.
"""

import numpy as np

from cftruth.calibrate import fit_isotonic
from cftruth.metrics import rll, uer_curve_arrays

rng = np.random.default_rng(0)
errors = rng.random(5000)

###############################################################################
# With uniformly spread errors, an uncertainty equal to the error puts the
# area near one half.  A shuffled copy carries no information.

perfect = uer_curve_arrays(errors, errors)
shuffled = uer_curve_arrays(errors, rng.permutation(errors))
print(f"perfect  AUC = {perfect.auc:.3f}")
print(f"shuffled AUC = {shuffled.auc:.3f}")

###############################################################################
# The threshold axis is the uncertainty divided by its maximum, so the area
# also depends on how the values are spread.  Heavy-tailed errors crowd most
# samples near zero and shrink the area even for a perfect ranking.

skewed = rng.exponential(size=5000)
print(f"perfect, exponential errors: AUC = {uer_curve_arrays(skewed, skewed).auc:.3f}")

###############################################################################
# Noisy but informative uncertainties land in between.  Multiplying them by a
# positive constant leaves the curve untouched.

noisy = errors + 0.5 * rng.random(errors.size)
for scale in (1.0, 1e-3):
    print(f"noisy x{scale:g}: AUC = {uer_curve_arrays(errors, scale * noisy).auc:.3f}")

###############################################################################
# Raw uncertainties are rarely on the error scale.  An isotonic map fitted on
# held-out pairs fixes the scale while keeping the order, which is what the
# likelihood score is sensitive to.

cal, test = slice(0, 2500), slice(2500, None)
cmap = fit_isotonic(np.column_stack([noisy[cal], errors[cal]]))
calibrated = np.maximum(cmap(noisy[test]), 1e-6)
print(f"RLL raw        = {rll(errors=errors[test], sigma2=noisy[test] ** 2):.3f}")
print(f"RLL calibrated = {rll(errors=errors[test], sigma2=calibrated ** 2):.3f}")
print(f"RLL ideal      = {rll(errors=errors[test], sigma2=errors[test] ** 2):.3f}")

###############################################################################
# The curve itself, at a few thresholds on the normalized uncertainty axis.

for xi in (0.0, 0.01, 0.05, 0.2, 0.5, 1.0):
    print(f"xi = {xi:4.2f}  relative error reduction = {uer_curve_arrays(errors, noisy).at(xi):.3f}")
