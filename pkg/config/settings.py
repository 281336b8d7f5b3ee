"""
Django settings for the lidar distillation pipeline.

The project has no web surface; Django hosts the apps, the management
commands and the test runner. Environment-level values are read with
python-decouple from the environment or a ``.env`` file.
"""

from pathlib import Path

from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


SECRET_KEY = config('SECRET_KEY', default='django-insecure-lad-pipeline-local-only')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',

    # Pipeline apps
    'core',
    'scenes',
    'geometry',
    'superpixels',
    'geoseg',
    'embed',
    'objectives',
    'training',
    'pipeline',
]

MIDDLEWARE = []


# Database
# Nothing is persisted in a database; sqlite satisfies the test runner.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# ============================================================================
# PIPELINE CONFIGURATION
# ============================================================================

# Defaults for runs started without a config file; flags override them.
LAD_SEED = config('LAD_SEED', default=0, cast=int)
LAD_OUTPUT_DIR = Path(config('LAD_OUTPUT_DIR', default='out'))
LAD_THREADS = config('LAD_THREADS', default=1, cast=int)
LAD_RECORD_TIMING = config('LAD_RECORD_TIMING', default=False, cast=bool)
LAD_LOG_LEVEL = config('LAD_LOG_LEVEL', default='INFO')


# ============================================================================
# LOGGING
# ============================================================================

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': LAD_LOG_LEVEL,
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': False,
        },
    },
}
