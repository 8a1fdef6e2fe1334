"""Layout constants of the synthetic structured images.

Every synthetic sample is drawn around these nominal values; the jitter,
noise and anomaly constants set how separable the anomalies are, and are
the knobs to turn if the trivial baseline leaves its target window.
Coordinates are (row, col) in pixels on a SIZE x SIZE canvas.
"""

SIZE = 128

BACKGROUND = -0.2
BODY_LEVEL = 0.15
BODY_RADII = (60.0, 58.0)
BODY_CENTER = (66.0, 64.0)

LUNG_LEVEL = -0.55
LUNG_CENTERS = ((64.0, 40.0), (64.0, 88.0))
LUNG_RADII = (40.0, 19.0)

RIB_COUNT = 6
RIB_FIRST_ROW = 34.0
RIB_PERIOD = 12.0
RIB_HALF_WIDTH = 2.2
RIB_LEVEL = 0.4
RIB_CURVATURE = 0.004  # rows of sag per squared column offset from the midline

MEDIASTINUM_LEVEL = 0.55
MEDIASTINUM_HALF_WIDTH = 9.0
MEDIASTINUM_ROWS = (22.0, 118.0)

EDGE_SOFTNESS = 1.5  # px, width of the logistic edge on every shape

JITTER = 0.015  # relative, on positions, sizes and intensities
NOISE_SIGMA = 0.02

BLOB_RADIUS = (8, 16)
BLOB_LEVEL = 1.0
SHUFFLE_SIDE = 24
SHUFFLE_TILE = 6
BEND_RADIUS = 14
BEND_AMPLITUDE = 5.0
