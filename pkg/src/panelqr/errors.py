"""Exception hierarchy shared across the package."""


class PanelQRError(Exception):
    """Base class for all panelqr errors."""


class PanelSchemaError(PanelQRError):
    """A required column is missing or the column mapping is malformed."""


class PanelDataError(PanelQRError):
    """A cell is non-finite or otherwise unusable; carries (row, column)."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class PanelBalanceError(PanelQRError):
    """The panel is unbalanced; carries the offending subject labels."""

    def __init__(self, message, subjects=()):
        super().__init__(message)
        self.subjects = tuple(subjects)


class DegenerateIndexError(PanelQRError):
    """The index variable is constant and cannot be rescaled to [0, 1]."""


class BandwidthSelectionError(PanelQRError):
    """Every candidate bandwidth produced an unusable cross-validation fit."""


class LocalDesignError(PanelQRError):
    """Too few effectively-weighted observations near an evaluation point."""

    def __init__(self, message, z=None, subjects=()):
        super().__init__(message)
        self.z = z
        self.subjects = tuple(subjects)


class AlignmentError(PanelQRError):
    """Coefficient paths do not share evaluation points or dimensions."""


class InferenceUnavailableError(PanelQRError):
    """Variance estimation failed at an evaluation point; carries z."""

    def __init__(self, message, z=None):
        super().__init__(message)
        self.z = z
