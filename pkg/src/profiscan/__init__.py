"""Reinforcement-learning trajectory optimization for laser profilometer inspection."""
