//! Environment dynamics checked against traces of the reference gym implementations.
//! Values produced by `tests/oracles/gym_traces.py`.

use safe_policy_search::environments::{mountain_car_step, pendulum_step};

const MC_CONTROLS: [f64; 50] = [0.25019093320933394, 0.794427601939151, 0.551371380490387, -0.5495856200188163, -0.39966743017754913, 0.7471068907925238, -0.9894693908688506, 0.6424568367655326, 0.5941388575040925, -0.06413009431255845, -0.39393514636137295, -0.44314877579845335, -0.4902608246917508, -0.10984738823470686, 0.009096517915906599, 0.10699470414898493, 0.9910005668687853, 0.5853238384275061, 0.24435845888232532, 0.9779202953637698, -0.5693826035288021, -0.6795759322843109, 0.22507920854606156, -0.9121159840772333, -0.9286394424528077, 0.02977764054274057, -0.0675879493494218, 0.8343355463857045, 0.2584525089820209, 0.028235293199027733, -0.006253129212991482, -0.5049701559453383, -0.9764119489149883, -0.6151957120293787, 0.38406424176367837, -0.5987865520260096, -0.2609273787955866, -0.9925315158958481, 0.6600954596034911, -0.6910778378771203, -0.4648013908724291, 0.7606643079616573, 0.019581619736846356, 0.6943004927317387, 0.27943433388505245, 0.4835418947237142, -0.8170087898739087, 0.08228764275297751, 0.01554447260069991, 0.7426787533857613];
const MC_POSITION: [f64; 50] = [-0.49980155660435527, -0.4985897993757373, -0.4967383764769134, -0.49591256705552683, -0.4958936666760375, -0.49496165512082635, -0.49572836194826986, -0.4957401681610663, -0.49506946249070816, -0.49470866067373315, -0.49515516627099876, -0.49647946331130133, -0.49874232212277203, -0.501356202695022, -0.5041231340184517, -0.5068755575065585, -0.5082668516713676, -0.5088951089667921, -0.5092670703144773, -0.5082796058951767, -0.5082610687138317, -0.5093768876454627, -0.5102617195656913, -0.5126147266954075, -0.5164430584476799, -0.5202803874958245, -0.5242439859676765, -0.5269512420452014, -0.5292456762847821, -0.5314554078551232, -0.5336155998330483, -0.5364581321694977, -0.5406688611759578, -0.545674414058962, -0.5499384242941336, -0.5549032725087082, -0.5600250730345364, -0.5663630170267832, -0.5713909651171913, -0.5770983153518947, -0.5831033415795888, -0.5875234536270548, -0.5914376914802639, -0.5938051917393767, -0.5952308767378112, -0.5953981335990559, -0.5962565628443864, -0.5964509321626841, -0.5960799331254445, -0.5940555809479865];
const MC_VELOCITY: [f64; 50] = [0.00019844339564474366, 0.0012117572286179793, 0.0018514228988238766, 0.0008258094213865529, 1.8900379489331966e-05, 0.0009320115552111831, -0.000766706827443519, -1.1806212796439705e-05, 0.0006707056703581347, 0.0003608018169750296, -0.0004465055972656134, -0.0013242970403025442, -0.0022628588114707226, -0.002613880572250011, -0.0027669313234296514, -0.002752423488106886, -0.0013912941648090958, -0.0006282572954244733, -0.00037196134768513424, 0.0009874644193005168, 1.8537181345042392e-05, -0.0011158189316310347, -0.0008848319202286352, -0.0023530071297161743, -0.0038283317522723546, -0.0038373290481445986, -0.00396359847185203, -0.002707256077524877, -0.00229443423958078, -0.0022097315703411315, -0.0021601919779250774, -0.0028425323364493294, -0.004210729006460187, -0.005005552883004178, -0.004264010235171693, -0.0049648482145745205, -0.00512180052582826, -0.0063379439922467825, -0.005027948090408172, -0.00570735023470336, -0.006005026227694064, -0.00442011204746611, -0.0039142378532091545, -0.0023675002591127935, -0.001425684998434475, -0.0001672568612447686, -0.0008584292453305061, -0.00019436931829760898, 0.00037099903723954923, 0.0020243521774580154];
const MC_REWARD: [f64; 50] = [-0.0062595503060157405, -0.06311152147227901, -0.030401039922387515, -0.03020443537314667, -0.01597340547447261, -0.05581687062696721, -0.09790496754663741, -0.04127507871067742, -0.03530009819962683, -0.00041126689965376417, -0.015518489953875635, -0.019638083749166788, -0.024035567622743562, -0.0012066448701986414, -8.274663819440974e-06, -0.0011447866715928814, -0.0982082123534254, -0.034260399583150934, -0.005971105642734508, -0.09563281040843628, -0.032419654920123706, -0.04618234477400904, -0.005066065011972147, -0.08319555684091796, -0.08623712140790617, -8.867078762926669e-05, -0.0004568130897260008, -0.06961158039627321, -0.006679769939910159, -7.972317820350617e-05, -3.910162495436747e-06, -0.025499485839545935, -0.09533802939839658, -0.037846576409933434, -0.014750534180150918, -0.03585453348871971, -0.006808309700513553, -0.09851188100465103, -0.043572601578914426, -0.04775885780049154, -0.021604033295694464, -0.0578610189406787, -3.834398315184508e-05, -0.04820531742075351, -0.0078083546953782975, -0.023381276395299952, -0.06675033627312286, -0.0006771256149841653, -2.4163062843391023e-05, -0.05515717307306284];
const WALL_POSITION: [f64; 20] = [-1.129031300575228, -1.1571375620949589, -1.1843785720012943, -1.2, -1.1992581039591645, -1.1977718551511143, -1.1955363654455893, -1.1925443667716542, -1.1887862903565949, -1.1842503761879142, -1.1789228159478047, -1.1727879334501121, -1.165828407351506, -1.1580255415849983, -1.1493595895379285, -1.1398101384177854, -1.1293565604525804, -1.117978537476263, -1.1056566649554995, -1.0923731405082018];
const WALL_VELOCITY: [f64; 20] = [-0.029031300575227837, -0.02810626151973102, -0.027241009906335392, 0.0, 0.0007418960408353682, 0.0014862488080503219, 0.0022354897055249135, 0.0029919986739351803, 0.0037580764150594243, 0.004535914168680641, 0.005327560240109564, 0.006134882497692463, 0.006959526098606237, 0.0078028657665075735, 0.008665952047069679, 0.00954945112014306, 0.010453577965205048, 0.011378022976317412, 0.012321872520763446, 0.013283524447297737];
const PEND_CONTROLS: [f64; 50] = [-0.693679704929212, 0.4909203360360652, -2.203741788272482, -0.5618409944463565, -0.8848182687089667, -1.7490013546477408, 1.5816905190953783, -0.6027691422484378, 2.3937394220561083, 0.44995846505305126, 0.5252812691492563, 0.6899829039416612, 0.8822512190639413, -1.7460599041581566, -0.29843266405906244, -1.3021801908523833, -0.48750850948009194, -2.0164795303412717, 2.339140255244107, -1.4249798132205997, 0.8588258130564248, -0.9978995926046486, 1.8703851307475219, 0.8110736916922692, -1.8419209209584713, 1.7253716043727643, 2.2247408557248978, 2.0195839409796337, 0.3485957392963863, -1.7727002311953655, -1.5376825251583381, 2.1395284237226218, 0.2616324383363189, -1.597237507755442, 1.9202844709823497, 0.7078585261124037, 0.3484713723690396, -0.6185608193503995, -0.44522358921435057, -1.3025539365907757, -2.3097135665438047, 1.8810940405463548, -0.1613489159295196, 0.23817599606867645, -0.8891834510988743, 1.2566245992746392, -2.3740156459911983, -0.6390736371739802, -2.348248528079442, -1.8855394889749533];
const PEND_ANGLE: [f64; 50] = [3.05513380892708, 3.0755950356485626, 3.083529376778632, 3.0894260600914474, 3.090641966492476, 3.0806501869409435, 3.0848050144236243, 3.08656746542508, 3.1053923198672924, 3.128949078836173, 3.156919568744525, 3.1894901936170723, 3.226882231585971, 3.2479843373325274, 3.2628660323729064, 3.263444763556508, 3.2558090262309287, 3.228899481333693, 3.213720088153235, 3.1851509121761126, 3.1613900115761626, 3.1294025116017705, 3.111900019111059, 3.1015938894920376, 3.0789729066885636, 3.0716389170612963, 3.08192605357492, 3.109449360205086, 3.140792300829052, 3.1588700029443766, 3.164767217753525, 3.184795464192827, 3.2051663524581615, 3.2111755512609483, 3.2289796300803486, 3.248819805442583, 3.267260198859369, 3.2763612470403998, 3.2770845805642748, 3.262973344096344, 3.2293215005956246, 3.206492248962446, 3.18002085373816, 3.1538950756272883, 3.1206390924439718, 3.0975934948013384, 3.0611973332953366, 3.0230196973977237, 2.9742781354173364, 2.9176400887275853];
const PEND_RATE: [f64; 50] = [0.27082310674573923, 0.4092245344296514, 0.15868682260138134, 0.11793366625630891, 0.024318128020574648, -0.19983559103064855, 0.08309654965361693, 0.03524902002911451, 0.376497088844247, 0.4711351793776173, 0.5594097981670351, 0.6514124974509459, 0.7478407593779779, 0.4220421149311244, 0.29763390080757784, 0.011574623672034101, -0.15271474651158679, -0.5381908979447164, -0.30358786360916656, -0.571383519542443, -0.475218011998995, -0.6397499994878404, -0.35004984981423215, -0.20612259238042574, -0.4524196560694844, -0.14667979254534308, 0.20574273027247686, 0.5504661326033091, 0.6268588124793218, 0.3615540423064886, 0.11794429618296359, 0.40056492878604594, 0.40741776530668444, 0.12018397605573844, 0.3560815763880011, 0.3968035072446916, 0.3688078683357136, 0.1820209636206221, 0.014466670477496502, -0.2822247293586135, -0.6730368700143894, -0.4565850326635682, -0.5294279044857257, -0.5225155622174299, -0.6651196636663299, -0.46091195285266806, -0.7279232301200386, -0.7635527179522603, -0.9748312396077475, -1.1327609337950237];
const PEND_REWARD: [f64; 50] = [-9.260767061904431, -9.34141810874036, -9.480031295264002, -9.51098723352659, -9.546727119104473, -9.555185907918082, -9.496900745541721, -9.517075811308418, -9.531022967961905, -9.657838928701853, -9.812795094086175, -9.805307475949176, -9.614161647077646, -9.399963795210601, -9.23034594409306, -9.132882788909187, -9.119084012539133, -9.171339325830735, -9.361626850226182, -9.432863857373654, -9.631202607042182, -9.769184887141412, -9.83758642634126, -9.69683305921226, -9.627525980322373, -9.5035194218152, -9.441117132959608, -9.506501206809876, -9.699098138983597, -9.907013940135025, -9.776782720377344, -9.729922466159897, -9.616133296873638, -9.4933507768293, -9.442375851718838, -9.341352790622498, -9.223240732765186, -9.109788800858185, -9.04450231579603, -9.038359153770303, -9.133645381737287, -9.374920526792744, -9.48691319715945, -9.657715743512345, -9.820550251774284, -9.784205867372597, -9.620329441863815, -9.424324751383047, -9.200949366163849, -8.944915280557627];

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn mountain_car_matches_reference_trace() {
    let mut s = [-0.5, 0.0];
    for k in 0..MC_CONTROLS.len() {
        let (next, r, _) = mountain_car_step(&s, MC_CONTROLS[k]);
        assert!(close(next[0], MC_POSITION[k]) && close(next[1], MC_VELOCITY[k]), "step {k}");
        assert!(close(r, MC_REWARD[k]), "reward {k}");
        s = next;
    }
}

#[test]
fn mountain_car_left_wall_matches_reference() {
    let mut s = [-1.1, -0.03];
    let mut hit = false;
    for k in 0..WALL_POSITION.len() {
        let (next, _, _) = mountain_car_step(&s, -1.0);
        assert!(close(next[0], WALL_POSITION[k]) && close(next[1], WALL_VELOCITY[k]), "step {k}");
        hit |= next[0] == -1.2 && next[1] == 0.0;
        s = next;
    }
    assert!(hit);
}

#[test]
fn mountain_car_goal_is_terminal_with_bonus() {
    let mut s = [0.3, 0.05];
    let mut first = None;
    for k in 0..30 {
        let (next, r, done) = mountain_car_step(&s, 1.0);
        if done {
            first = Some(k);
            assert!(close(r, 100.0 - 0.1));
            break;
        }
        s = next;
    }
    assert_eq!(first, Some(2));
}

#[test]
fn pendulum_matches_reference_trace() {
    let mut s = [std::f64::consts::PI - 0.1, 0.3];
    for k in 0..PEND_CONTROLS.len() {
        let (next, r) = pendulum_step(&s, PEND_CONTROLS[k]);
        assert!(close(next[0], PEND_ANGLE[k]) && close(next[1], PEND_RATE[k]), "step {k}");
        assert!(close(r, PEND_REWARD[k]), "reward {k}");
        s = next;
    }
}
