"""Modular multi-agent reinforcement-learning portfolio engine.

Per-asset signal modules (a dueling double DQN trading one asset on prices and
news sentiment) feed a portfolio allocator (a PPO agent over the stacked
signal-comprised tensors), with online-portfolio baselines, performance
metrics and a statistical stability protocol.
"""
__version__ = "0.1.0"
