# Constants shared by the library and the command-line tools.
# Values that define artifact formats must stay in sync with the readers in imaging.py and cli/.

DEFAULT_ENCODING = 'utf-8'

# A size of the chunk passed used in imap
# it should be sufficiently large, but not too large
IMAP_PROC_CHUNK_QTY = 4

# Numerics
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
STATS_EPS = 1e-7
GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_TOL = 1e-4

# Network
OUTPUT_STRIDE = 16
NUM_CLASSES = 2
CELL_CLASS = 0
BACKGROUND_CLASS = 1
FUSION_WIDTH = 32
SAM_REDUCTION = 8

ENCODER_VGG16 = 'vgg16'
ENCODER_TOY = 'toy'

# Training schedule (initial LR, halving window, poly phase)
INIT_LR = 0.0006
MAX_EPOCHS = 150
BATCH_SIZE = 32
HALVE_EPOCH = 50
POLY_EPOCH = 80
POLY_POWER = 0.9
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Data preprocessing
CROP_SIDE = 224
ZOOM_SCALES = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75]
PIXEL_SCALE = 1.0 / 255.0

# Inference
PATCH_SIDE = 200
MS_SCALES = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0]
BIN_THRESHOLD = 0.5

# Watershed
MARKER_FRAC = 0.5
MIN_SIZE = 10
BG_MARGIN = 3

ORGANS = ['breast', 'liver', 'kidney', 'prostate', 'bladder', 'colon', 'stomach']

# Split names and the MoNuSeg split sizes (train / same organ / different organ)
SPLIT_TRAIN = 'train'
SPLIT_ST = 'st'
SPLIT_DT = 'dt'
SPLIT_NAMES = [SPLIT_TRAIN, SPLIT_ST, SPLIT_DT]
MONUSEG_SPLIT_QTY = {SPLIT_TRAIN: 16, SPLIT_ST: 8, SPLIT_DT: 6}

# File and directory naming conventions
MANIFEST_FILE = 'manifest.json'
STATS_FILE = 'stats.json'
POOL_INDEX_FILE = 'pool.csv'
RUN_LOG_FILE = 'run_log.txt'
TRAIN_STAT_FILE = 'train_stat.json'
TRAIN_LOG_FILE = 'train_log.csv'
IMAGE_SUBDIR = 'images'
ANNOT_SUBDIR = 'annotations'
MASK_SUBDIR = 'masks'
POOL_SUBDIR = 'pool'
PROB_SUBDIR = 'prob'
LABEL_SUBDIR = 'labels'
OVERLAY_SUBDIR = 'overlay'
MODEL_BEST = 'model.best'
MODEL_LAST = 'model.last'
IMAGE_EXTS = ['.png', '.tif', '.tiff']

CHECKPOINT_VERSION = 2
