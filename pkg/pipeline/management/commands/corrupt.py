from pipeline.management.base import PipelineCommand
from pipeline.services import run_corrupt


class Command(PipelineCommand):
    help = 'Probe robustness under LiDAR corruptions.'
    stage = staticmethod(run_corrupt)
