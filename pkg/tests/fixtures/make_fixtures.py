"""Regenerate the committed oracle fixtures.

Run from the repository root:  python tests/fixtures/make_fixtures.py
Only the exact-enumeration oracle and the population table writer are
used, never the estimator.
"""

import os

from gapdecomp.data import write_table
from gapdecomp.decompose import write_long_csv
from gapdecomp.synth import load_spec, oracle_decompose, population_grid, population_table

HERE = os.path.dirname(os.path.abspath(__file__))

if __name__ == "__main__":
    spec = load_spec(os.path.join(HERE, "two_cell.json"))
    write_table(population_table(spec), os.path.join(HERE, "two_cell_population.csv"))
    grid = population_grid(spec)
    oracle = oracle_decompose(spec, grid)
    write_long_csv(os.path.join(HERE, "two_cell_oracle_curves.csv"), grid, oracle.series())
