import sys

from ectraj.cli import main

sys.exit(main())
