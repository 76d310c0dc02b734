from .config import ExperimentConfig, config_from_dict, config_to_dict, load_config, normalize
from .runner import (
    MetricsRecord,
    SweepRow,
    evaluate,
    read_metrics,
    run_experiment,
    sweep,
    write_metrics,
)
