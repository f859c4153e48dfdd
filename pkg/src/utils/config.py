"""
This module manages configuration settings for the toolkit by
loading environment variables from `.env` files. It defines the logging
and threading defaults read from the environment, as well as the numeric
constants shared by the services (input encoding, network sizes, scoring
block size, root-finding tolerances).
"""

import os
from dotenv import load_dotenv

load_dotenv()

# Logging
LOG_LEVEL = os.getenv("NNPP_LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("NNPP_LOG_FILE", "logs/nnpp.log")

# Runtime
DEFAULT_SEED = int(os.getenv("NNPP_DEFAULT_SEED", "0"))
DEFAULT_THREADS = int(os.getenv("NNPP_THREADS", "1"))

# Input encoding
INPUT_EPSILON = 1e-9

# Network sizes
RNN_UNITS = 64
HIDDEN_UNITS = 64
HIDDEN_LAYERS = 2
PIECEWISE_BINS = 128

# Training
LEARNING_RATE = 0.001
BATCH_SIZE = 256
DEPTH_GRID = (5, 10, 20, 40)
GRADIENT_CLIP_NORM = 10.0
EXP_CLAMP = 60.0
POSITIVE_FLOOR = 1e-12

# Evaluation
BLOCK_SIZE = 300
MEDIAN_TOLERANCE = 1e-9
MEDIAN_BRACKET_START = 1e-6
MEDIAN_BRACKET_CAP = 2.0 ** 64
PERMUTATION_RESAMPLES = 10_000

# Simulation
TREND_TOLERANCE = 1e-10
SYNTHETIC_PROCESSES = (
    "s_poisson",
    "n_poisson",
    "s_renewal",
    "n_renewal",
    "self_correcting",
    "hawkes1",
    "hawkes2",
)

CHECKPOINT_MAGIC = b"NNPPCKPT"
CHECKPOINT_VERSION = 1
