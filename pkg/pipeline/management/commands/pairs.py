from pipeline.management.base import PipelineCommand
from pipeline.services import run_pairs


class Command(PipelineCommand):
    help = 'Build superpixel/superpoint correspondences for every frame.'
    stage = staticmethod(run_pairs)
