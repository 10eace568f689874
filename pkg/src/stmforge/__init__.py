"""Simulated STM images of crystal lattices and convolutional autoencoders
trained on patches of them, built on numpy.
"""
__version__ = "0.1.0"
