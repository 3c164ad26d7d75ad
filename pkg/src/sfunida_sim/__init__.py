"""Simulated pseudo-labeling for online source-free universal domain adaptation."""
