"""Temporal radar-chart churn prediction."""
