// Generated from UCD 16.0.0 ArabicShaping.txt / DerivedJoiningType.txt, U+0600..U+06FF.
// Join-causing (U+0640 TATWEEL) is folded into dual-joining.
const ARABIC_BLOCK_JOINING: &[(u32, u32, JoiningClass)] = &[
    (0x0600, 0x060F, JoiningClass::NonJoining),
    (0x0610, 0x061A, JoiningClass::Transparent),
    (0x061B, 0x061B, JoiningClass::NonJoining),
    (0x061C, 0x061C, JoiningClass::Transparent),
    (0x061D, 0x061F, JoiningClass::NonJoining),
    (0x0620, 0x0620, JoiningClass::DualJoining),
    (0x0621, 0x0621, JoiningClass::NonJoining),
    (0x0622, 0x0625, JoiningClass::RightJoining),
    (0x0626, 0x0626, JoiningClass::DualJoining),
    (0x0627, 0x0627, JoiningClass::RightJoining),
    (0x0628, 0x0628, JoiningClass::DualJoining),
    (0x0629, 0x0629, JoiningClass::RightJoining),
    (0x062A, 0x062E, JoiningClass::DualJoining),
    (0x062F, 0x0632, JoiningClass::RightJoining),
    (0x0633, 0x063F, JoiningClass::DualJoining),
    (0x0640, 0x0640, JoiningClass::DualJoining),
    (0x0641, 0x0647, JoiningClass::DualJoining),
    (0x0648, 0x0648, JoiningClass::RightJoining),
    (0x0649, 0x064A, JoiningClass::DualJoining),
    (0x064B, 0x065F, JoiningClass::Transparent),
    (0x0660, 0x066D, JoiningClass::NonJoining),
    (0x066E, 0x066F, JoiningClass::DualJoining),
    (0x0670, 0x0670, JoiningClass::Transparent),
    (0x0671, 0x0673, JoiningClass::RightJoining),
    (0x0674, 0x0674, JoiningClass::NonJoining),
    (0x0675, 0x0677, JoiningClass::RightJoining),
    (0x0678, 0x0687, JoiningClass::DualJoining),
    (0x0688, 0x0699, JoiningClass::RightJoining),
    (0x069A, 0x06BF, JoiningClass::DualJoining),
    (0x06C0, 0x06C0, JoiningClass::RightJoining),
    (0x06C1, 0x06C2, JoiningClass::DualJoining),
    (0x06C3, 0x06CB, JoiningClass::RightJoining),
    (0x06CC, 0x06CC, JoiningClass::DualJoining),
    (0x06CD, 0x06CD, JoiningClass::RightJoining),
    (0x06CE, 0x06CE, JoiningClass::DualJoining),
    (0x06CF, 0x06CF, JoiningClass::RightJoining),
    (0x06D0, 0x06D1, JoiningClass::DualJoining),
    (0x06D2, 0x06D3, JoiningClass::RightJoining),
    (0x06D4, 0x06D4, JoiningClass::NonJoining),
    (0x06D5, 0x06D5, JoiningClass::RightJoining),
    (0x06D6, 0x06DC, JoiningClass::Transparent),
    (0x06DD, 0x06DE, JoiningClass::NonJoining),
    (0x06DF, 0x06E4, JoiningClass::Transparent),
    (0x06E5, 0x06E6, JoiningClass::NonJoining),
    (0x06E7, 0x06E8, JoiningClass::Transparent),
    (0x06E9, 0x06E9, JoiningClass::NonJoining),
    (0x06EA, 0x06ED, JoiningClass::Transparent),
    (0x06EE, 0x06EF, JoiningClass::RightJoining),
    (0x06F0, 0x06F9, JoiningClass::NonJoining),
    (0x06FA, 0x06FC, JoiningClass::DualJoining),
    (0x06FD, 0x06FE, JoiningClass::NonJoining),
    (0x06FF, 0x06FF, JoiningClass::DualJoining),
];
