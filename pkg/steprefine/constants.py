SCHEMA_VERSION = 1
CHECKPOINT_MAGIC = b'STEPREFINE-CKPT 1\n'

DEFAULT_FEATURE_DIM = 256
FEATURE_COUNT_CLIP = 8

DEFAULT_N_SAMPLES = 5
DEFAULT_ITERATIONS = 4
DEFAULT_BETA = 0.2
DEFAULT_NODE_BUDGET = 10 ** 6
DEFAULT_ACCURACY_TAU = 0.35

NOTHING_HAPPENS = 'Nothing happens'
