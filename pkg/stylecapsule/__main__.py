import sys

from stylecapsule.cli import main

sys.exit(main())
