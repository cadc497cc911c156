"""ECG preprocessing, multi-label disease screening, risk stratification and
comorbidity analysis."""

__version__ = "0.1.0"
