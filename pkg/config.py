import os
from dotenv import load_dotenv, dotenv_values

from errors import ConfigurationError

# Load environment variables from .env file
load_dotenv()


class Config:
    """Training defaults shared by every preset"""

    # Runtime
    LOG_LEVEL = os.environ.get('SYMNET_LOG_LEVEL') or 'WARNING'
    DTYPE = os.environ.get('SYMNET_DTYPE') or 'float64'
    OUTPUT_DIR = os.environ.get('SYMNET_OUTPUT_DIR') or 'runs'
    SEED = int(os.environ.get('SYMNET_SEED') or 7)

    # Data
    MODE = 'single'
    DATASET = ''
    EMBEDDINGS = ''
    EMBEDDING_MODE = 'one_hot'

    # Optimisation
    LR = 1e-2
    BATCH_SIZE = 32
    EPOCHS = 200
    MOMENTUM = 0.0
    LR_SCHEDULE = 'constant'
    WARMUP_EPOCHS = 0

    # Loss weights (lambda1..lambda7) and triplet margin
    LAMBDA1 = 5e-2
    LAMBDA2 = 1e-2
    LAMBDA3 = 1.0
    LAMBDA4 = 1e-2
    LAMBDA5 = 3e-2
    LAMBDA6 = 0.0
    LAMBDA7 = 0.0
    MARGIN = 0.5

    # Inference scale applied to the relative moving distance before sigmoid
    GAMMA = 1.0

    # Network shape; 0 means derived from the feature dimension
    ATTN_HIDDEN = 0
    TRUNK_HIDDEN = 0
    CLS_HIDDEN = 0
    BN_MOMENTUM = 0.9
    BN_SINGLE_SAMPLE = 'error'
    DISTANCE = 'l2'
    ATTR_CLS_INPUT = 'transformed'

    # Bookkeeping
    LOG_INTERVAL = 10
    CHECKPOINT_POLICY = 'best'
    RESUME = ''


class SyntheticConfig(Config):
    """Desk-scale runs on generated data"""
    LR = 1e-2
    BATCH_SIZE = 64
    EPOCHS = 300
    MOMENTUM = 0.9
    LR_SCHEDULE = 'cosine'
    LAMBDA1 = 1.0
    LAMBDA2 = 5e-1
    LAMBDA3 = 1.0
    LAMBDA4 = 1.0
    LAMBDA5 = 1.0


class SyntheticMultiConfig(SyntheticConfig):
    """Generated multi-attribute data with planted correlations"""
    MODE = 'multi'
    LAMBDA6 = 1.0
    LAMBDA7 = 1.0


class MITStatesConfig(Config):
    LR = 5e-4
    BATCH_SIZE = 512
    EPOCHS = 320
    LAMBDA1 = 5e-2
    LAMBDA2 = 1e-2
    LAMBDA3 = 1.0
    LAMBDA4 = 1e-2
    LAMBDA5 = 3e-2
    MARGIN = 0.5
    EMBEDDING_MODE = 'word_vector'
    ATTN_HIDDEN = 512
    TRUNK_HIDDEN = 768


class MITStatesGeneralizedConfig(MITStatesConfig):
    LR = 3e-4
    EPOCHS = 1000
    LAMBDA1 = 2e-2
    LAMBDA2 = 2e-2
    LAMBDA5 = 1.0
    MARGIN = 0.3


class UTZapposConfig(Config):
    LR = 1e-4
    BATCH_SIZE = 256
    EPOCHS = 600
    LAMBDA1 = 1e-2
    LAMBDA2 = 3e-2
    LAMBDA3 = 1.0
    LAMBDA4 = 5e-1
    LAMBDA5 = 5e-1
    MARGIN = 0.5
    EMBEDDING_MODE = 'word_vector'
    ATTN_HIDDEN = 512
    TRUNK_HIDDEN = 768


class UTZapposGeneralizedConfig(UTZapposConfig):
    LR = 1e-3
    BATCH_SIZE = 512
    EPOCHS = 290
    LAMBDA1 = 2e-2
    LAMBDA2 = 1e-2
    # given as "1-e2" upstream
    LAMBDA4 = 1e-2
    LAMBDA5 = 1.0


class APYConfig(Config):
    MODE = 'multi'
    LR = 3e-3
    BATCH_SIZE = 128
    EPOCHS = 177
    LAMBDA1 = 5e-2
    # given as "s1e-3" upstream
    LAMBDA2 = 1e-3
    LAMBDA3 = 1.0
    LAMBDA4 = 5e-2
    LAMBDA5 = 1.0
    LAMBDA6 = 5e-2
    LAMBDA7 = 1.0
    MARGIN = 0.5
    EMBEDDING_MODE = 'word_vector'
    ATTN_HIDDEN = 512
    TRUNK_HIDDEN = 256


class SUNConfig(APYConfig):
    LR = 5e-3
    EPOCHS = 95
    LAMBDA1 = 8e-3
    LAMBDA2 = 1e-3
    LAMBDA4 = 3e-1
    LAMBDA5 = 5e-2
    LAMBDA6 = 6e-2
    LAMBDA7 = 6e-1
    TRUNK_HIDDEN = 1536


class TestingConfig(SyntheticConfig):
    """Tiny runs for the test suite"""
    EPOCHS = 2
    BATCH_SIZE = 8
    MOMENTUM = 0.0
    LR_SCHEDULE = 'constant'
    LOG_INTERVAL = 1
    CHECKPOINT_POLICY = 'last'


# Configuration dictionary
config = {
    'synthetic': SyntheticConfig,
    'synthetic_multi': SyntheticMultiConfig,
    'mit_states': MITStatesConfig,
    'mit_states_generalized': MITStatesGeneralizedConfig,
    'ut_zappos': UTZapposConfig,
    'ut_zappos_generalized': UTZapposGeneralizedConfig,
    'apy': APYConfig,
    'sun': SUNConfig,
    'testing': TestingConfig,
    'default': SyntheticConfig
}


def get_config(name):
    """Look up a preset class by name"""
    try:
        return config[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown preset '{name}' (choose from {', '.join(sorted(config))})") from None


def load_config_file(path):
    """Read a flat key=value config file into a {lowercase key: string} dict"""
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    values = dotenv_values(path)
    return {key.strip().lower(): value for key, value in values.items() if value is not None}
