"""
Quick sanity check to confirm the scientific stack imports correctly.
Run from project root: python env_check.py
"""


def main() -> None:
    try:
        import joblib  # type: ignore
        import numpy  # type: ignore
        import pandas  # type: ignore
        import patsy  # type: ignore
        import pyarrow  # type: ignore
        import scipy  # type: ignore
        import tqdm  # type: ignore
        import yaml  # type: ignore
    except Exception as exc:  # pragma: no cover - defensive
        print(f"Import failed: {exc}")
        raise

    print("Imports succeeded.")
    for module in (numpy, scipy, pandas, patsy, joblib, pyarrow, tqdm, yaml):
        print(f"{module.__name__} version: {getattr(module, '__version__', 'unknown')}")
    try:
        import lifelines  # type: ignore
    except ImportError:
        print("lifelines not installed; its cross-check tests will be skipped.")
    else:
        print(f"lifelines version: {lifelines.__version__}")


if __name__ == "__main__":
    main()
