class XAuditError(Exception):
    pass


class SchemaError(XAuditError, ValueError):
    pass


class DataError(XAuditError, ValueError):
    pass


class EmptyInputError(DataError):
    pass


class TrainingError(XAuditError, ValueError):
    pass


class BudgetExhausted(XAuditError):
    """Raised by a query oracle once its budget is spent."""
