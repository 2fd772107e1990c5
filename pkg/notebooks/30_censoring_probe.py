"""
Empirical marginal censoring rate of every preset scenario.
Run: python notebooks/30_censoring_probe.py
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from crtsurv.simlab import PRESETS, censoring_rate_probe

N_REPS = 100


def main() -> None:
    for k, (name, spec) in enumerate(PRESETS.items(), start=1):
        rates = censoring_rate_probe(spec, N_REPS)
        print(f"[{k}/{len(PRESETS)}] Scenario {name}: censoring rate {rates['censoring_rate'].mean():.3f}")


if __name__ == "__main__":
    main()
