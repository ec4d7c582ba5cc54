"""
Init file cho metrics package
"""
from .base_metric import BaseMetric, MetricInput
from .metric_factory import MetricFactory
from .quality_models import FogModel, NssModel, fit_fog_model, fit_nss_model, fog_density, nss_score
from .report import MetricReport, build_report, load_report, save_report

__all__ = [
    'BaseMetric',
    'MetricInput',
    'MetricFactory',
    'FogModel',
    'NssModel',
    'fit_fog_model',
    'fit_nss_model',
    'fog_density',
    'nss_score',
    'MetricReport',
    'build_report',
    'load_report',
    'save_report',
]
