from pipeline.management.base import PipelineCommand
from pipeline.services import run_superpixel


class Command(PipelineCommand):
    help = 'Compute (or ingest) one superpixel map per camera frame.'
    stage = staticmethod(run_superpixel)
