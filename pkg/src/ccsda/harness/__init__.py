"""Configuration, experiment stages and command-line interface."""
