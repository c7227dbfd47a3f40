from weldloop.expcli.runner import compare_to_baseline, run_experiment

__all__ = ["compare_to_baseline", "run_experiment"]
