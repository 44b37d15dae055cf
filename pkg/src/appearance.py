"""Per-identity appearance codes, optimized jointly with the renderer."""
import logging
from typing import Iterator, Sequence

import numpy as np

from src.nn import Module, parameter
from src.tensor import Tensor

logger = logging.getLogger(__name__)

CODE_DIM = 16


class UnknownIdentityError(KeyError):
    """Raised when an identity has no registered appearance code."""

    def __init__(self, identity: str) -> None:
        super().__init__(identity)
        self.identity = identity

    def __str__(self) -> str:
        return f"Unknown identity '{self.identity}'"


class CodeTable(Module):
    """Identity id -> learnable code vector; codes start at zero."""

    def __init__(self, identities: Sequence[str], dim: int = CODE_DIM) -> None:
        self.dim = dim
        self.codes = {str(name): parameter(np.zeros((1, dim))) for name in identities}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, code in self.codes.items():
            yield f"{prefix}code.{name}", code

    @property
    def ids(self) -> list[str]:
        return list(self.codes)

    def __contains__(self, identity: str) -> bool:
        return identity in self.codes


def get_code(table: CodeTable, identity: str) -> Tensor:
    """The live (1, n_a) code of an identity."""
    try:
        return table.codes[identity]
    except KeyError:
        raise UnknownIdentityError(identity) from None


def regularize_codes(table: CodeTable, weight: float) -> Tensor:
    """weight * mean over identities of the squared code norm."""
    codes = list(table.codes.values())
    if not codes:
        return Tensor(0.0)
    total = (codes[0] * codes[0]).sum()
    for code in codes[1:]:
        total = total + (code * code).sum()
    return total * (weight / len(codes))


def transfer_render(models, pose, code_id: str, cam, settings, **kwargs):
    """
    Render the skeleton of one identity with the appearance code of another.

    Geometry comes from the occupancy conditioning of `pose`; only the code
    changes, so this is render_frame with `code_id` swapped in.
    """
    from src.render import render_frame

    get_code(models.codes, code_id)
    logger.info("Transfer render with appearance code '%s'", code_id)
    return render_frame(models, pose, cam, code_id, settings, **kwargs)
