MSG_NOT_FINITE = "The result is not finite."
MSG_NO_MATCH = "The output has diverged from the reference."
MSG_NOT_RAISED = "The invalid input was accepted."
