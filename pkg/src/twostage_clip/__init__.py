"""Desk-scale two-stage contrastive pretraining for two-tower image-text models."""
