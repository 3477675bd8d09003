import sys

from face_tracer.cli import main

sys.exit(main())
