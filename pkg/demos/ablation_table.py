"""Full desk-scale run: the six-row variant table and the strategy comparison.

Takes about two minutes on one core.  Pass a directory to also keep the CSVs
and checkpoints.
"""
import sys

from msann.experiment import ExperimentConfig, describe, run_experiment, write_outputs

result = run_experiment(ExperimentConfig())
print(describe(result))
if len(sys.argv) > 1:
    write_outputs(result, sys.argv[1])
