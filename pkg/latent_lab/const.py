"""Constants for latent-lab."""

DOMAIN = "latent_lab"

ENV_OUTPUT_ROOT = "LATENT_LAB_OUTPUT"
DEFAULT_OUTPUT_ROOT = "runs"

# Special tokens
PAD_TOKEN = "<pad>"
EOS_TOKEN = "<eos>"
BOT_TOKEN = "<bot>"
EOT_TOKEN = "<eot>"
PAUSE_TOKEN = "<pause>"
SPECIAL_TOKENS = (PAD_TOKEN, EOS_TOKEN, BOT_TOKEN, EOT_TOKEN, PAUSE_TOKEN)
CONCEPT_ENDING = "us"
SUFFIX_MARKER = "##"
CONCEPT_SUFFIX = SUFFIX_MARKER + CONCEPT_ENDING

# Marker ids inside realized sequences
LATENT_ID = -1
IGNORE_INDEX = -100

# Variants
VARIANT_COCONUT = "coconut"
VARIANT_COT = "cot"
VARIANT_NO_COT = "no_cot"
VARIANT_WO_CURRICULUM = "wo_curriculum"
VARIANT_WO_THOUGHT = "wo_thought"
VARIANT_PAUSE_AS_THOUGHT = "pause_as_thought"
VARIANT_PAUSE_TOKEN = "pause_token"
VARIANTS = (
    VARIANT_COCONUT,
    VARIANT_COT,
    VARIANT_NO_COT,
    VARIANT_WO_CURRICULUM,
    VARIANT_WO_THOUGHT,
    VARIANT_PAUSE_AS_THOUGHT,
    VARIANT_PAUSE_TOKEN,
)
CURRICULUM_VARIANTS = (VARIANT_COCONUT, VARIANT_WO_THOUGHT, VARIANT_PAUSE_AS_THOUGHT)

FINAL_STAGE_HOLD = "hold"
FINAL_STAGE_DROP_REMAINDER = "extra-stage-drop-remainder"

# Optimizer
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_ADAM_EPS = 1e-8

# Model
DEFAULT_N_LAYER = 4
DEFAULT_D_MODEL = 192
DEFAULT_N_HEAD = 6
DEFAULT_CONTEXT_LENGTH = 512
DEFAULT_LAYER_NORM_EPS = 1e-5
ATTENTION_MASK_VALUE = -1e9

# ProsQA generation
DEFAULT_NODES = 25
DEFAULT_POISSON_LAMBDA = 1.5
DEPTH_WEIGHT = 1.5
BRANCH_ONLY_ZERO = 0.35
BRANCH_ONLY_ONE = 0.7
DEFAULT_MIN_PATH = 2
DEFAULT_MAX_PATH = 6
DEFAULT_SPLIT_SIZES = (17886, 300, 500)
SPLITS = ("train", "val", "test")
MAX_GRAPH_ATTEMPTS = 10000

# Curriculum presets
PRESET_PROSQA = "prosqa"
PRESET_GSM8K = "gsm8k"

# Checkpoint
CHECKPOINT_MAGIC = b"LATLAB01"
CHECKPOINT_FORMAT_VERSION = 1

# Evaluation
DEFAULT_MAX_NEW = 64
DEFAULT_EVAL_WORKERS = 4

# Exit codes
EXIT_OK = 0

# Config keys
CONF_SEED = "seed"
CONF_OUTPUT_DIR = "output_dir"
CONF_DATA = "data"
CONF_GENERATION = "generation"
CONF_MODEL = "model"
CONF_SCHEDULE = "schedule"
CONF_EVAL = "eval"
CONF_PROBE = "probe"
CONF_PRESET = "preset"

VOCAB_PROSQA = "prosqa"
VOCAB_CORPUS = "corpus"

ANALYSIS_PARALLELISM = "parallelism"
ANALYSIS_HEIGHT = "height"
ANALYSIS_VALUES = "values"
ANALYSIS_DECODE = "decode"
ANALYSES = (ANALYSIS_PARALLELISM, ANALYSIS_HEIGHT, ANALYSIS_VALUES, ANALYSIS_DECODE)
DEFAULT_TOP_K = 5
