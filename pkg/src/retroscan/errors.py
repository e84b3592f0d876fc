"""Exception hierarchy shared by every retroscan module."""


class RetroscanError(Exception):
    """Base class for all library errors."""


class EmptyLocus(RetroscanError):
    """No usable genotype observations at a locus."""


class DomainError(RetroscanError):
    """Numeric argument outside its mathematical domain."""


class DegenerateFrequency(RetroscanError):
    """Allele frequency at 0 or 1; HWE-based quantities are undefined."""


class NotTestable(RetroscanError):
    """The requested statistic is degenerate on this data (zero variance,
    empty group, monomorphic locus)."""


class ConvergenceError(RetroscanError):
    """Iterative fit exhausted its iteration budget."""


class SeparationError(RetroscanError):
    """Logistic-type fit has no finite maximizer (separated data)."""


class ContractViolation(RetroscanError):
    """Caller combined objects that do not belong together."""


class InconsistentGenotype(RetroscanError):
    """Observed genotypes cannot be produced by any haplotype pair in scope."""


class SimulationStall(RetroscanError):
    """Case/control accrual failed within the configured draw budget."""


class StratumEmpty(RetroscanError):
    """Resampling stratum has no donors for a required genotype class."""
