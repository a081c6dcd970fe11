"""Federated distillation privacy lab: simulate FedMD / DS-FL / Cronus and
attack the outputs clients share on the public dataset."""

__version__ = "0.1.0"
