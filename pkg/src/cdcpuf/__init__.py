"""Simulation of arbiter, XOR and CDC-XOR PUFs with LR and MLP modeling attacks."""

from .errors import BudgetError, DivergedTrainingError, FormatError, InvalidInputError, PufError
from .puf import (
    ArbiterPuf,
    CdcXorPuf,
    eval_arbiter,
    eval_cdc,
    eval_xor,
    load_puf,
    sample_arbiter,
    sample_cdc_xpuf,
    save_puf,
    transform_challenge,
)
from .crp import (
    CrpSet,
    LcgParams,
    Provenance,
    generate_crpset,
    read_crpset,
    split_crpset,
    write_crpset,
)
from .attack_lr import LrModel, LrTrainConfig, lr_accuracy, lr_train
from .attack_nn import MlpModel, NnTrainConfig, nn_accuracy, nn_train
from .bench import ExperimentConfig, emit_report, run_attack_once, run_sweep, summarize

__version__ = "0.1.0"
