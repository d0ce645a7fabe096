"""Frozen calibrated constants and fixed experiment choices.

Calibrated values are the corpus maxima from `anderson_lab.acceptance`
(the *_corpus helpers there) times a 1.25 safety factor, rounded up
to two significant digits.  Changing any number here bumps the version.
"""

CONSTANTS_VERSION = "1"

# Caccioppoli: max over 10 seeds x 5 eigenfunctions x r in {1/32, 1/16, 1/8} was 0.988
CACCIOPPOLI_C = 1.3
# Aronszajn: max over annular bumps, d in {1, 2}, r in {1/8, 1/5, 1/4}, beta in 0..10 was 9.66e-4
ARONSZAJN_C = 1.3e-3
# deformed-ball three circles ratio over the five pipeline patches was 0.501
THREE_CIRCLES_C = 0.63

# experiment choices
RENORM_SEED = 3
DEFAULT_MOLLIFIER_CELLS = 4  # eps = 4 / N

ALL = {
    "constants_version": CONSTANTS_VERSION,
    "caccioppoli_C": CACCIOPPOLI_C,
    "aronszajn_C": ARONSZAJN_C,
    "three_circles_C": THREE_CIRCLES_C,
    "renorm_seed": RENORM_SEED,
    "default_mollifier_cells": DEFAULT_MOLLIFIER_CELLS,
}
