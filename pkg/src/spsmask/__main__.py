from spsmask.cli import main
import sys
sys.exit(main())
