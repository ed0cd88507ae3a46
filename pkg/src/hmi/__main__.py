import sys

from .cli import hmi_main

sys.exit(hmi_main())
