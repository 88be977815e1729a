# Experiment pipeline: config, data, training, evaluation and the CLI

__version__ = "0.1.0"
__all__ = ["config", "data", "evaluation", "trainer", "monitoring", "ablation", "verify", "schema_validator", "main"]
