"""Offline soft-Bellman policy/value training on enumerable token MDPs."""
