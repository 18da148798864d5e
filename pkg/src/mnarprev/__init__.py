"""Selection-model prevalence estimation with follow-up data."""
