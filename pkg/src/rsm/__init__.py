"""Recurrent sparse memory: a sparse combinatoric recurrent layer trained
with local, depth-2 credit assignment, plus task harnesses."""

__version__ = "0.1.0"
