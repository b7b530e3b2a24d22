"""Multitask expression / valence-arousal training with teacher-student distillation."""
