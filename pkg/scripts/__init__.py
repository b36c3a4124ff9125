"""Simple linear mixed models: MME solver, variance components and small-sample inference"""
