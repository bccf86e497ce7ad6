"""forge: sparse neural-network backdoors delivered by an accelerator trojan, at desk scale."""

__version__ = "0.1.0"
