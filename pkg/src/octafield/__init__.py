"""Neural surface reconstruction guided by a jointly fitted octahedral frame field."""

__version__ = "0.1.0"
