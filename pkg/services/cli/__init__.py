# Config-driven experiment runner: python -m services.cli <command>
from services.cli.config import ExperimentConfig, load_config, parse_config
from services.cli.handler import (
    prepare_data, run_train, run_attack_stage, run_evaluate, run_landscape, run_shift, run_report
)
