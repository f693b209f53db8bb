class TrainingDivergedError(ArithmeticError):
    """A loss or gradient became non-finite during training"""

    def __init__(self, band, epoch, step, last_finite_loss):
        self.band = band
        self.epoch = epoch
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f'Training diverged in band {band} at epoch {epoch}, step {step} '
            f'(last finite loss {last_finite_loss})'
        )
