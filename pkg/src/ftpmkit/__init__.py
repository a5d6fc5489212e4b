"""Toolkit for the software stage of an fTPM state-extraction attack.

Decrypts firmware-TPM NV storage from a leaked chip secret, unseals TPM
objects without their authorization policy, and recovers full-disk-encryption
keys from TPM-only, TPM+PIN and naive sealed-secret protectors.
"""

from .errors import DomainFailure, FormatError, FtpmError

__version__ = "0.1.0"

__all__ = ["DomainFailure", "FormatError", "FtpmError", "__version__"]
