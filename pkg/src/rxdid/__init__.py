"""Claims analytics: provider prescribing profiles, surgical cohorts,
opioid outcomes, and difference-in-differences estimation with
cluster-robust GLMs."""

__version__ = "0.1.0"
