"""Experiment harness: configuration, metrics files and the command-line interface."""
