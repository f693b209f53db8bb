#!/usr/bin/env python
"""Command-line entry point for the GFDN toolkit (Django management commands)."""
import os
import sys


def _limit_blas_threads():
    """Forward GFDN_NUM_THREADS to the BLAS pools before numpy is imported."""
    threads = os.environ.get("GFDN_NUM_THREADS")
    if not threads:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)


def main():
    """Run toolkit commands (synthesize_dataset, train, render, ...)."""
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "gfdn_project.settings")
    _limit_blas_threads()
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == "__main__":
    main()
