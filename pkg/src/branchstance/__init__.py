"""Conversational stance detection toolkit.

Models social-media conversation threads as trees, encodes each instance
with its ancestor context, trains and evaluates a convolutional stance
head plus context-free baselines, explains predictions by span occlusion,
and backs a two-round annotation workflow.
"""

__version__ = "0.1.0"
