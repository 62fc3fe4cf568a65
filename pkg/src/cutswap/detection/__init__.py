"""Memory-bank anomaly scoring and ROC-AUC evaluation."""
