"""
HighFM - masked-autoencoder foundation model toolkit for high-frequency geostationary imagery
"""

__version__ = "0.1.0"
