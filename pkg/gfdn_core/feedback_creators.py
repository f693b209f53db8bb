from abc import ABC, abstractmethod

import numpy as np
from django.core.exceptions import ValidationError

from .models import FeedbackMatrix


class FeedbackMatrixCreator(ABC):
    """
    Abstract creator class defining the factory method.
    """

    @abstractmethod
    def create_product(self, mixing_blocks, coupling=None) -> FeedbackMatrix:
        """
        Factory method that concrete creators must implement.
        """
        pass

    def _assemble(self, coupling, mixing_blocks):
        """
        Builds the N x N matrix whose block (j, k) is coupling[j, k] * M_j @ M_k.
        """
        blocks = [np.asarray(m, dtype=float) for m in mixing_blocks]
        if not blocks:
            raise ValidationError('At least one mixing block is required')
        size = blocks[0].shape
        for k, block in enumerate(blocks):
            if block.ndim != 2 or block.shape[0] != block.shape[1] or block.shape != size:
                raise ValidationError(f'Mixing block {k} has shape {block.shape}, expected {size}')

        coupling = np.asarray(coupling, dtype=float)
        g = len(blocks)
        if coupling.shape != (g, g):
            raise ValidationError(f'Coupling matrix must be {g}x{g} for {g} mixing blocks, got {coupling.shape}')

        rows = []
        for j in range(g):
            row = [coupling[j, k] * (blocks[j] @ blocks[k]) for k in range(g)]
            rows.append(row)
        return blocks, coupling, np.block(rows)


class BlockDiagonalFeedbackCreator(FeedbackMatrixCreator):
    """
    Concrete creator for decoupled groups (identity coupling).
    """

    def create_product(self, mixing_blocks, coupling=None) -> FeedbackMatrix:
        g = len(mixing_blocks)
        if coupling is not None and not np.array_equal(np.asarray(coupling, dtype=float), np.eye(g)):
            raise ValidationError('Block-diagonal feedback accepts only an identity coupling matrix')
        blocks, coupling, matrix = self._assemble(np.eye(g), mixing_blocks)
        return FeedbackMatrix(
            kind=FeedbackMatrix.BLOCK_DIAGONAL,
            mixing_blocks=tuple(blocks),
            coupling=coupling,
            matrix=matrix,
        )


class CoupledFeedbackCreator(FeedbackMatrixCreator):
    """
    Concrete creator for groups mixed by an orthogonal coupling matrix.
    """

    def create_product(self, mixing_blocks, coupling=None) -> FeedbackMatrix:
        if coupling is None:
            raise ValidationError('Coupled feedback requires a coupling matrix')
        blocks, coupling, matrix = self._assemble(coupling, mixing_blocks)
        return FeedbackMatrix(
            kind=FeedbackMatrix.COUPLED,
            mixing_blocks=tuple(blocks),
            coupling=coupling,
            matrix=matrix,
        )
