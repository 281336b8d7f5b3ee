from pipeline.management.base import PipelineCommand
from pipeline.services import run_segment


class Command(PipelineCommand):
    help = 'Segment each scene aggregate into ground and shared-id clusters.'
    stage = staticmethod(run_segment)
