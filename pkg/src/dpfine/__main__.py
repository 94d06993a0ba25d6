import sys

from dpfine.cli import main

sys.exit(main())
