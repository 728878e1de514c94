"""Numeric defaults for the rewards, GRPO and two-stage inference.

Every value can be overridden through the config dataclasses or the command
line.
"""

# region-guided reward: sigmoid(ALPHA / (distance + EPS_RG))
ALPHA = 200.0
EPS_RG = 0.2
# weight of the format reward in the composite
BETA = 0.05
# answers with similarity strictly above this count as correct
SIM_THRESHOLD = 0.8

# GRPO
CLIP_EPS = 0.2
GAMMA_KL = 0.04
GROUP_SIZE = 4
LEARNING_RATE = 1e-7
STD_FLOOR = 1e-8

# inference
INPUT_RESOLUTION = 512
CROP_SIZE = 512
EVAL_TEMPERATURE = 0.01
SAMPLING_TEMPERATURE = 0.7
MAX_NEW_TOKENS = 1024
MAX_CROPS = 1
BACKEND_RETRIES = 3
BACKOFF_SECONDS = 0.5
