# Configuration loader for the DCNN + fast random forest project
import os
import json

from dotenv import load_dotenv

load_dotenv()


def load_config(config_path=None):
    """Load configuration from config.json (or the file named by DCNNFRF_CONFIG)."""
    if config_path is None:
        script_dir = os.path.dirname(os.path.abspath(__file__))
        config_path = os.environ.get('DCNNFRF_CONFIG', os.path.join(script_dir, 'config.json'))

    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            config = json.load(f)
        return config
    except FileNotFoundError:
        raise FileNotFoundError(f"config.json not found at {config_path}")
    except json.JSONDecodeError:
        raise ValueError(f"Invalid JSON in {config_path}")


# Load the configuration
config = load_config()

# Logging configuration
LOG_FILE = config['logging_settings']['log_file']
LOG_LEVEL = os.environ.get('DCNNFRF_LOG_LEVEL', config['logging_settings']['log_level'])
PROGRESS_BARS = config['logging_settings'].get('progress_bars', True)

# Network presets, name -> {"conv_layers": [...], "dense_units": int}
NETWORK_PRESETS = config['network_presets']

# Training settings
BATCH_SIZE = config['training_settings']['batch_size']
LEARNING_RATE = config['training_settings']['learning_rate']
MOMENTUM = config['training_settings']['momentum']
INPUT_DROPOUT = config['training_settings']['input_dropout']
HIDDEN_DROPOUT = config['training_settings']['hidden_dropout']
EPOCHS = config['training_settings']['epochs']
INIT_SCALE = config['training_settings'].get('init_scale', 'fan-in-scaled')
DIVERGED_RETRIES = config['training_settings'].get('diverged_retries', 2)

# Forest settings
N_TREES = config['forest_settings']['n_trees']
MIN_LEAF = config['forest_settings']['min_leaf']
MAX_DEPTH = config['forest_settings']['max_depth']
MTRY_POLICY = config['forest_settings'].get('mtry_policy', 'formula')

# Reference values from the published result tables
REFERENCE_MTRY = config.get('reference_mtry', {})
REFERENCE_RESULTS = config.get('reference_results', {})
DATASET_NOTES = config.get('dataset_notes', {})

# Experiment settings
FOLDS = config['experiment_settings']['folds']
SEED = config['experiment_settings']['seed']
_threads = os.environ.get('DCNNFRF_THREADS') or config['experiment_settings'].get('threads')
THREADS = int(_threads) if _threads else None
REPORT_DIR = config['experiment_settings']['report_dir']
