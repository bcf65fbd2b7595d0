"""Adversarial-attack transferability toolkit for small CNN classifiers."""

from .attacks import (ATTACK_KINDS, AttackConfig, AttackResult, cw_l2,
                      deepfool, fgsm, ifgsm, jsma, lbfgs_attack, pgd,
                      run_attack)
from .boost import BoostConfig, BoostResult, attack_and_boost, boost_margin
from .datasets import (Dataset, Patch, ingest_flows, load_dataset,
                       quantize_columns, save_dataset, split_counts,
                       synth_dataset)
from .errors import (CapacityError, ConfigurationError, ContractError,
                     DataError, DimensionError, FormatError, ParseError,
                     RegistryError, TlabError)
from .harness import (ModelRegistry, ReportRow, ScenarioSpec, TransferReport,
                      compare_reports, parse_report, render_report,
                      run_scenario)
from .metrics import DistortionStats, asr, distortion, mean_psnr, transfer_success
from .models import (ModelSpec, TrainConfig, TrainedModel, build_spec,
                     load_checkpoint, save_checkpoint, train)

__all__ = [name for name in dir() if not name.startswith("_")]
