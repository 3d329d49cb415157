class PowerFlowLabError(Exception):
    """Base class for every domain error raised by the lab"""
